package main

var c = make(chan int, 2)
var d = make(chan int, 0)
var e = make(chan int, 0)

func A() {
	c <- 1
	e <- 0
}

func B() {
	<-c
	<-d
}

func C() {
	<-e
	<-c
}

func main() {
	go A()
	go B()
	go C()
}
